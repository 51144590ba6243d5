"""Multi-camera BEV instance prediction on a small numpy autodiff engine."""

from .estimator import BEVPredFormer
from .geometry import BEVGridConfig, Camera, CameraIntrinsics, Pose, default_rig
from .metrics import iou_metric, vpq_metric
from .model import BEVPredFormerNet, ModelConfig
from .postprocess import make_instance_prediction
from .synth import GenConfig, generate_dataset, generate_scenario
from .train import TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "BEVPredFormer", "BEVGridConfig", "Camera", "CameraIntrinsics", "Pose", "default_rig",
    "iou_metric", "vpq_metric", "BEVPredFormerNet", "ModelConfig", "make_instance_prediction",
    "GenConfig", "generate_dataset", "generate_scenario", "TrainConfig", "evaluate",
    "load_checkpoint", "predict", "save_checkpoint", "train_stage1", "train_stage2",
]

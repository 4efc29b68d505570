"""Seeded lung nodule segmentation by slice-to-slice ROI propagation."""

from .inference import InferenceConfig, OracleSegmenter, NetworkSegmenter, segment_nodule, segment_multiview
from .losses import LossConfig, total_loss
from .metrics import MetricReport, evaluate
from .network import ArchConfig, MesahaNet, init_params, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_corpus, generate_phantom
from .preprocess import RoiBox
from .training import DatasetSpec, TrainConfig, build_dataset, train
from .volume_store import BinaryMask3D, CtVolume, read_mask, read_volume, write_mask, write_volume

__version__ = "0.1.0"

"""Quantitative instance-level explanation maps for volumetric segmentation."""

from .config import RunConfig, load_run_config
from .instances import (
    LesionInstance,
    binarize,
    categorize,
    connected_components,
    filter_min_volume,
)
from .phantom import Phantom, PhantomConfig, generate_phantom, zscore_normalize
from .saliency import (
    NoiseSpec,
    SaliencyMap,
    gradcampp_class,
    gradcampp_instance,
    smoothgrad_instance_avg,
    smoothgrad_instance_max,
)
from .unet import TrainConfig, UNetConfig, build_unet, infer_volume, train
from .volio import MetaVolume, read_metavolume, write_metavolume

__version__ = "0.1.0"

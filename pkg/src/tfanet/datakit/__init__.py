from .dataset import Dataset, DatasetError, PreprocessConfig, Sample, load_dataset, load_image, preprocess_image
from .formats import FormatError, read_pnm, read_tensor, tensor_io, write_pnm, write_tensor
from .synth import DEFECT_KINDS, LOGICAL, STRUCTURAL, SynthSpec, synth_dataset

__all__ = [
    "DEFECT_KINDS", "Dataset", "DatasetError", "FormatError", "LOGICAL", "PreprocessConfig", "STRUCTURAL",
    "Sample", "SynthSpec", "load_dataset", "load_image", "preprocess_image", "read_pnm",
    "read_tensor", "synth_dataset", "tensor_io", "write_pnm", "write_tensor",
]

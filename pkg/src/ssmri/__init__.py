"""Self-supervised undersampled MRI reconstruction at desk scale."""

from .config import ExperimentSpec, TrainConfig
from .errors import BudgetError, FormatError, SolverError, TrainingError, ValidationError
from .kspace import SamplingMask, adjoint, fft2c, ifft2c, make_mask, partition_mask, undersample
from .metrics import hybrid_loss, psnr, ssim
from .multicoil import CoilSensitivities, cg_sense, forward_mc, adjoint_mc, simulate_coils, sos_combine
from .phantom import Dataset, gen_dataset, gen_ellipse_phantom, shepp_logan
from .reconnet import ReconNet, load_params, reconstruct, save_params

__version__ = "0.1.0"

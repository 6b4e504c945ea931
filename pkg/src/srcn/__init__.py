"""Grid-based spatiotemporal traffic speed forecasting with a from-scratch autodiff engine."""
from .autodiff import NumericalHealthError, ShapeError, Tape, TapeError, Tensor
from .grid_codec import GridSpec, LinkGeometry, NetworkMap, build_network_map, decode_frame, encode_frame, rasterize_link
from .lstm import LstmCellParams, LstmState, cell_step, run_stacked
from .model import SrcnConfig, SrcnParams, forward, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

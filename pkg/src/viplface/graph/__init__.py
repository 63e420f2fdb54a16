"""Network descriptors, the DAG executor, model files and FLOP counting."""
from .builtins import ALL_NAMES, BUILTIN_NAMES, TINY, builtin, builtin_text
from .descriptor import KINDS, LayerDef, NetworkDescriptor, parse_descriptor, serialize, topo_order
from .flops import FlopReport, LayerCost, count_flops
from .modelfile import MAGIC, VERSION, load_model, save_model
from .network import Network
from .shapes import fan_in, infer_shapes, param_shapes

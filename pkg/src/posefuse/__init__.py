"""posefuse: multi-view, multi-person 3D human pose fusion.

Per-camera 2D joint heat maps and keypoint detections go in; temporally
smoothed 3D skeletons come out.  Detections are linked into person identities
across time (bounding-box IoU) and across cameras (back-projected ray
distance), each joint's 3D state space is discretized by sampling heat maps
and triangulating, and a discrete model couples data support, temporal
smoothness and symmetric-joint separation, optimized with loopy sum-product
belief propagation.
"""

from .bodymodel import BodyModel, CRFParams
from .errors import PoseFuseError

__version__ = "0.1.0"

__all__ = ["BodyModel", "CRFParams", "PoseFuseError", "__version__"]

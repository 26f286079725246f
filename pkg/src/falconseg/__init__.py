"""falconseg: few-shot segmentation of patient slice stacks with unlabeled support.

The package is organized around an exactly-testable geometry kernel (distance
transforms and boundary metrics), a small float64 conv-net stack with
hand-written gradients, episodic training, adversarial fine-tuning, and
gradient-free task-aware inference.  Hot numeric kernels run through numba
when available; set FALCONSEG_BACKEND=numpy to force the pure-numpy path.
"""

__version__ = "0.1.0"

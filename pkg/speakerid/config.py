import os

# Number of intra-op threads torch may use. One thread keeps forward passes and
# gradients bit-identical between runs.
THREADS = int(os.getenv('SPEAKERID_THREADS', '1'))

# When set, torch is asked for deterministic kernels and the thread count above
# is enforced.
DETERMINISTIC = os.getenv('SPEAKERID_DETERMINISTIC', '1') not in ('', '0', 'false', 'no')

# Sliding analysis window over speech segments, in seconds.
WINDOW_LENGTH = 1.5
WINDOW_SHIFT = 0.75

# Speech segments separated by silence shorter than this (seconds) are merged
# into one `oraclevad` region.
MERGE_GAP = 0.5

# Tolerance around every reference boundary that is not scored, in seconds.
COLLAR = 0.25

# Name of the resolved configuration written into every output directory.
RESOLVED_CONFIG_NAME = 'config.resolved.yaml'


def configure_torch() -> None:
	"""Apply THREADS and DETERMINISTIC to torch. Imported lazily so that the
	pure numpy parts of the package do not pay for importing torch."""
	import torch
	if DETERMINISTIC:
		torch.set_num_threads(THREADS)
		torch.use_deterministic_algorithms(True)

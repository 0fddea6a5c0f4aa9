import sys
from pathlib import Path

import torch

# deterministic single-thread math in the test process; ladder workers
# pin their own thread counts
torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))

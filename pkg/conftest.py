import sys
from pathlib import Path

# flat packages (agents, config, utils) are imported from the repository root
sys.path.insert(0, str(Path(__file__).resolve().parent))

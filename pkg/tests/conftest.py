import sys
from pathlib import Path

# make sibling test helpers (reference oracles, golden fixtures) importable
sys.path.insert(0, str(Path(__file__).parent))

import sys
from pathlib import Path

"""Unit test package for molfusion."""

molfusion_path = Path(__file__).parent.parent / "molfusion"
assert isinstance(molfusion_path, Path)
sys.path.insert(0, str(molfusion_path.absolute()))
sys.path.insert(0, str(Path(__file__).parent.absolute()))

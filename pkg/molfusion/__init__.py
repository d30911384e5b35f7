import sys
from pathlib import Path
"""Top-level package for molfusion, multi-view molecular pretraining."""

molfusion_path = Path(__file__).parent
assert isinstance(molfusion_path, Path)
sys.path.insert(0, str(molfusion_path.absolute()))
from metainfo import author, email, version

__author__ = author
__email__ = email
__version__ = version

from .app import create_app
from .ops import RegistryOps, verify_dir

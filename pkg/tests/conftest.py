import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

# Single-core CI boxes blow hypothesis' default deadline on torch-heavy tests.
settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

sys.path.insert(0, str(Path(__file__).parent))

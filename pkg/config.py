"""Process-level settings read from the environment (after load_dotenv in app.py)."""
import os

VERSION = "0.1.0"

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
# 0 keeps torch's default thread count
THREADS = int(os.getenv('GSDF_THREADS', '0'))
DEVICE = os.getenv('GSDF_DEVICE', 'cpu')
RUNS_DIR = os.getenv('GSDF_RUNS_DIR', 'runs')

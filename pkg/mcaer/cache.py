import os

from joblib import Memory

# location=None turns memory.cache into a passthrough
memory = Memory(os.environ.get("MCAER_CACHE") or None, verbose=0)

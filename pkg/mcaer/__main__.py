import sys

from mcaer.cli import main

sys.exit(main())

import sys

from mfwgf.cli import main

sys.exit(main())

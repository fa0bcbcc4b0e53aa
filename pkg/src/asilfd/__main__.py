import sys

from asilfd.cli import main

sys.exit(main())

import sys

from hetmt.cli import main

sys.exit(main())

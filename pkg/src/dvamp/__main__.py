import sys

from dvamp.cli import main

sys.exit(main())

import sys

from statebus.cli import main

sys.exit(main())

import sys

from vla_kitchen.cli import main

sys.exit(main())

import sys

from airspde.cli import main

sys.exit(main())

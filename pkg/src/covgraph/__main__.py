import sys

from covgraph.cli import main

sys.exit(main())

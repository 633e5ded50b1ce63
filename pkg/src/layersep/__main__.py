import sys

from layersep.cli import main

sys.exit(main())

import sys

from mbxlab.cli import main

sys.exit(main())

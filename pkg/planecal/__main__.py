import sys

from planecal.cli import main

sys.exit(main())

import sys

from mfkinv.cli import main

sys.exit(main())

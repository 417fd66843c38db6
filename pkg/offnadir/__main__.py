import sys

from .bin.offnadir import main

sys.exit(main())

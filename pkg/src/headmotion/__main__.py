import sys

from headmotion.cli import main

sys.exit(main())

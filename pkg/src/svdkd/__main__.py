import sys

from svdkd.cli import main

sys.exit(main())

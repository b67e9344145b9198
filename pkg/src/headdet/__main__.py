import sys

from headdet.cli import main

sys.exit(main())

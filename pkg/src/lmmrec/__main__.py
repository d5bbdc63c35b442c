import sys

from lmmrec.cli import main

sys.exit(main())

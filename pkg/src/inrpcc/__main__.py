import sys

from inrpcc.cli import main

sys.exit(main())

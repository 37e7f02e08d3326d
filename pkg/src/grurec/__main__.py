import sys

from grurec.cli import main

sys.exit(main())

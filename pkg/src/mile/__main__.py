import sys

from mile.cli import main

sys.exit(main())

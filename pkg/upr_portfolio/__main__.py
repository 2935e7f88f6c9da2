import sys

from upr_portfolio.cli import main

sys.exit(main())

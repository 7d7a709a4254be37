import sys

from eda.commands import main
from eda.log import setup_sentry

setup_sentry()

sys.exit(main())

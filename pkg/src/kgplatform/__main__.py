import sys

from kgplatform.cli import main

sys.exit(main())

import sys

from vbb.harness.cli import main

sys.exit(main())

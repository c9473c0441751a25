import sys

from patchattn.cli import main

sys.exit(main())

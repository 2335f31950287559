import sys

from diffpmcmc.cli import main

sys.exit(main())

import sys

from uniprompt.cli import main

sys.exit(main())

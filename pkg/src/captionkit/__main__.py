import sys

from captionkit.cli import main

sys.exit(main())

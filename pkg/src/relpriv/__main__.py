import sys

from relpriv.cli import main

if __name__ == "__main__":
    sys.exit(main())

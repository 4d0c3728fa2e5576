import sys

from pcdenoise.main import main

if __name__ == "__main__":
    sys.exit(main())

import sys

from src.main import main

# Logging is configured inside main() before the command is dispatched

if __name__ == "__main__":
    sys.exit(main())

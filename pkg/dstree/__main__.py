"""Allow `python -m dstree`."""

from .cli import main

if __name__ == "__main__":
    main()

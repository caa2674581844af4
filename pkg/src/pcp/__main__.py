from pcp.cli import main
import sys

sys.exit(main())

from rkadjoint.cli import main

raise SystemExit(main())

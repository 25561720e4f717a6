from patternloom.cli import main

raise SystemExit(main())

from latsys.cli import main

main()

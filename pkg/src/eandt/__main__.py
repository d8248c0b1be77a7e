from eandt.cli import main

main()

from viewcluster.cli import main

main()

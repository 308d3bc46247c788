from stackqa.cli import main

main()

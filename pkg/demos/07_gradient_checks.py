"""Every backward pass in the package is written by hand, so every one is
checked against central differences.  This prints the worst relative error
per operation over ten random draws."""

from placerec.selfcheck import CHECKS, check_all

for report in check_all(CHECKS, seeds=range(10)):
    print(report)

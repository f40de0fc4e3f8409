# Storage layer package for ControlSR

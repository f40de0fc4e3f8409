# Model layer package for ControlSR

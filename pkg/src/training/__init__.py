# Training layer package for ControlSR

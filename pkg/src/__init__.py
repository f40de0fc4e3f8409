# ControlSR source tree

# Analysis layer package for ControlSR (probes, metrics)

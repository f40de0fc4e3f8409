# Data layer package for ControlSR (degradation, toy images)

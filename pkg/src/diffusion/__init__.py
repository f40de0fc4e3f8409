# Diffusion layer package for ControlSR (schedules, sampler)

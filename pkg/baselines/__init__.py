# Baseline modules

# Data modules

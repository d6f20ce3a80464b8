# Model modules

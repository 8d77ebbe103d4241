"""Joint transmit/RIS beamforming for RIS-aided ISAC with an unsupervised CNN."""
__version__ = "0.1.0"

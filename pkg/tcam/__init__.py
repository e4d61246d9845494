"""Behavioral simulator for the capacitive-RRAM 3T1R1C ternary CAM."""

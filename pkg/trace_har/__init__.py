"""
trace-har: activity timelines from smart-home sensor events and recognizer predictions
"""
__version__ = "0.1.0"

"""Top-level package marker for the tool-call policy learner."""

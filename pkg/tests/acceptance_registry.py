"""Results of the acceptance criteria, reported at the end of the run."""

# criterion number -> (passed, detail)
RESULTS = {}

"""Book Mirror Plus test suite.""" 
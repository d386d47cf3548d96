def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (criteria 5 and 6 train models)")

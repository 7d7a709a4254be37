from eda.log import setup_logging

setup_logging()

from pathlib import Path
from dotenv import load_dotenv
import os

load_dotenv()

# Logging
LOG_LEVEL = os.getenv("NILM_LOG_LEVEL", "INFO")

# Directory Configuration
DATA_DIR = Path(os.getenv("NILM_DATA_DIR", "data"))
RESULTS_DIR = Path(os.getenv("NILM_RESULTS_DIR", "results"))

# Broker Configuration
BROKER_ADDRESS = os.getenv("NILM_BROKER_ADDRESS", "127.0.0.1:5672")
BROKER_CAPACITY = int(os.getenv("NILM_BROKER_CAPACITY", "10000"))
CONNECT_TRIES = int(os.getenv("NILM_CONNECT_TRIES", "5"))

# Pipeline Defaults
WINDOW = int(os.getenv("NILM_WINDOW", "31"))
BATCH_THRESHOLD = int(os.getenv("NILM_BATCH_THRESHOLD", "16"))

# Request Configuration
REQUEST_TIMEOUT = float(os.getenv("NILM_REQUEST_TIMEOUT", "10"))
HEALTH_PERIOD = float(os.getenv("NILM_HEALTH_PERIOD", "1.0"))


# Create a settings object for easy access
class Settings:
    log_level = LOG_LEVEL
    data_dir = DATA_DIR
    results_dir = RESULTS_DIR
    broker_address = BROKER_ADDRESS
    broker_capacity = BROKER_CAPACITY
    connect_tries = CONNECT_TRIES
    window = WINDOW
    batch_threshold = BATCH_THRESHOLD
    request_timeout = REQUEST_TIMEOUT
    health_period = HEALTH_PERIOD


settings = Settings()

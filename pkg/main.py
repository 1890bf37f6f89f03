"""
memshare command-line entry point.

    python main.py train config.json --episodes 2000
    python main.py eval runs/<run> --episodes 1000
    python main.py corrupt runs/<run> --noise-std 1.0 --compare
    python main.py sweep config.json --axis memory-size=32,64,128,200
    python main.py analyze runs/<run> --seed 3
    python main.py inspect runs/<run>
"""

import sys

from dotenv import load_dotenv

from memshare.cli import main

# Load environment variables from .env file
load_dotenv()

if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Bayesian Dirichlet regression by Laplace linearization - Startup Script
"""

import os
import sys
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Add current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

if __name__ == '__main__':
    try:
        from cli import main
    except ImportError as e:
        print(f"Error importing modules: {e}")
        print("Make sure you have installed all dependencies:")
        print("   pip install -r requirements.txt")
        sys.exit(1)

    sys.exit(main())

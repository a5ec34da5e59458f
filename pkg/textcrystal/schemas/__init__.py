"""
Pydantic schemas package
"""